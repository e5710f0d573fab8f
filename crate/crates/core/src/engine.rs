//! The replica-exchange engine: initialisation, non-reversible communication
//! sweeps, optional local exploration, truncation completion, burn-in,
//! sample collection, online reward refinement, checkpointing and
//! diagnostics.

use std::fmt::Debug;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctmc::DiscreteState;
use crate::ensemble::ReplicaEnsemble;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::path::PathSegment;
use crate::rng::{Purpose, RngFactory};
use crate::sde::{em_step, simulate_segment, SdeProcess};
use crate::tasks::{ContinuousTask, DiscreteCfgTask, RewardTerm};

/// Local exploration kernel choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalMove {
    #[default]
    Off,
    /// Unadjusted Langevin step with step size `sigma_t^2 dt / 2`.
    Ula,
    /// Per-token Metropolis-Hastings with exact concrete-score ratios.
    CtmcMh,
}

/// A scheduled task delta: replaces the reward term at the given iteration.
/// Deltas other than reward additions/replacements are rejected at config
/// time (changing temperatures or models mid-run would silently mix targets
/// across the event boundary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineEvent {
    pub at_iteration: u64,
    pub reward: RewardTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub local_move: LocalMove,
    pub resample_top_level: bool,
    pub seed: u64,
    #[serde(default)]
    pub online: Vec<OnlineEvent>,
    /// Worker threads for the parallel phases; 1 = serial. Results do not
    /// depend on this value.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        // iterations == burn_in (or zero iterations) is a legal degenerate
        // run: the collection window is simply empty
        if self.burn_in > self.iterations {
            return Err(Error::InvalidConfig(format!(
                "burn-in {} exceeds the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        let mut prev = 0u64;
        for ev in &self.online {
            if ev.at_iteration < prev {
                return Err(Error::InvalidConfig(
                    "online events must be sorted by iteration".into(),
                ));
            }
            prev = ev.at_iteration;
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// The default burn-in: 2% of the iteration budget.
    pub fn default_burn_in(iterations: u64) -> u64 {
        iterations / 50
    }
}

/// Where a replica last touched the ladder boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extreme {
    Bottom,
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    /// Swap attempts per adjacent pair, indexed by the lower level.
    pub pair_attempts: Vec<u64>,
    pub pair_accepts: Vec<u64>,
    /// Completed bottom-top-bottom excursions per replica.
    pub round_trips: Vec<u64>,
    /// Score/rate evaluations in the annealing region (the M*K*N budget).
    pub nfe: u64,
    /// Evaluations spent completing samples below the truncation time,
    /// tracked separately from the communication budget.
    pub completion_evals: u64,
    pub samples_collected: u64,
    pub pairs_rejected_nonfinite: u64,
    pub local_moves_skipped: u64,
    pub wall_time_s: f64,
}

impl Diagnostics {
    fn new(num_states: usize) -> Self {
        Diagnostics {
            pair_attempts: vec![0; num_states.saturating_sub(1)],
            pair_accepts: vec![0; num_states.saturating_sub(1)],
            round_trips: vec![0; num_states],
            ..Default::default()
        }
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.pair_attempts
            .iter()
            .zip(self.pair_accepts.iter())
            .map(|(&a, &acc)| if a == 0 { 0.0 } else { acc as f64 / a as f64 })
            .collect()
    }

    pub fn total_round_trips(&self) -> u64 {
        self.round_trips.iter().sum()
    }
}

/// One collected sample: the bottom-level state completed to the data end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow<S> {
    pub iteration: u64,
    pub replica_id: usize,
    pub state: S,
}

/// What the generic engine needs from a task/domain pairing.
pub trait Dynamics: Send + Sync {
    type State: Clone + PartialEq + Debug + Serialize + DeserializeOwned + Send + Sync;

    /// Column labels for sample output.
    fn state_labels(&self) -> Vec<String>;
    fn state_fields(&self, s: &Self::State) -> Vec<String>;
    fn is_finite_state(&self, s: &Self::State) -> bool;

    /// Number of models evaluated per score query (the J in the NFE budget).
    fn models_per_eval(&self) -> u64;

    fn sample_top(&self, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Result<Self::State>;
    fn simulate_fwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>>;
    fn simulate_bwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>>;
    fn swap_log_accept(
        &self,
        fwd: &PathSegment<Self::State>,
        bwd: &PathSegment<Self::State>,
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> Result<f64>;
    /// One local kernel step at the level's target; `Ok(None)` when the move
    /// is unavailable (missing score or zero step size).
    fn local_move(
        &self,
        x: &Self::State,
        level: usize,
        grid: &TimeGrid,
        kind: LocalMove,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Self::State>>;
    /// Integrate the proposal denoising dynamics along descending completion
    /// times (no communication below the truncation time).
    fn complete(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self::State>;
    /// Denoise one ladder segment during initialisation, landing the level
    /// below near its marginal. Defaults to the backward proposal, which is
    /// the denoising direction for discrete tasks; continuous tasks override
    /// with the guided reverse drift.
    fn init_descend(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        self.simulate_bwd(x, times, rng)
    }
    /// Install a new reward term (online refinement).
    fn apply_reward(&mut self, term: RewardTerm) -> Result<()>;
    /// Advance one SMC particle down a segment. Defaults to the backward
    /// proposal, which is the guided denoising direction for discrete tasks;
    /// continuous tasks simulate the guided reverse drift instead (their
    /// heuristic backward proposal is the plain noising kernel, which cannot
    /// transport particles toward the data end).
    fn smc_propagate(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        self.simulate_bwd(x, times, rng)
    }
    /// Incremental SMC log-weight of a propagated segment between two
    /// levels: `-(log_target_ratio + log R^Q)` with the proposal pair that
    /// generated the path, so the weighted particles target the lower
    /// level's distribution at the path's early endpoint.
    fn segment_log_weight(
        &self,
        path: &PathSegment<Self::State>,
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> Result<f64>;
}

/// Versioned checkpoint container.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "S: Serialize + DeserializeOwned")]
pub struct Checkpoint<S> {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub ensemble: ReplicaEnsemble<S>,
    pub diagnostics: Diagnostics,
    pub replica_tags: Vec<Option<Extreme>>,
    pub online_applied: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

struct PairOutcome<S> {
    pair: usize,
    result: Option<(S, S, bool)>, // (new lower state, new upper state, accepted)
    nonfinite: bool,
}

pub struct Engine<D: Dynamics> {
    pub dynamics: D,
    pub grid: TimeGrid,
    pub config: EngineConfig,
    pub config_hash: String,
    factory: RngFactory,
    pub ensemble: ReplicaEnsemble<D::State>,
    pub diagnostics: Diagnostics,
    replica_tags: Vec<Option<Extreme>>,
    online_applied: u64,
    pub samples: Vec<SampleRow<D::State>>,
}

impl<D: Dynamics> Engine<D> {
    /// Initialise the ladder per the algorithm's opening step: draw the top
    /// level from the reference and roll each lower level out of the one
    /// above with the backward proposal.
    pub fn init(dynamics: D, grid: TimeGrid, config: EngineConfig, config_hash: &str) -> Result<Self> {
        config.validate()?;
        let factory = RngFactory::new(config.seed);
        let m = grid.num_pairs();
        let mut states: Vec<D::State> = Vec::with_capacity(m + 1);
        let mut top_rng = factory.stream(m as u64, 0, Purpose::Init);
        let top = dynamics.sample_top(&grid, &mut top_rng)?;
        states.push(top);
        for level in (0..m).rev() {
            let above = states.last().unwrap();
            let mut rng = factory.stream(level as u64, 0, Purpose::Init);
            let path = dynamics.init_descend(above, grid.pair_times(level + 1), &mut rng)?;
            states.push(path.first().clone());
        }
        states.reverse();
        let ensemble = ReplicaEnsemble::new(states);
        let diagnostics = Diagnostics::new(m + 1);
        let mut engine = Engine {
            dynamics,
            grid,
            config,
            config_hash: config_hash.to_string(),
            factory,
            ensemble,
            diagnostics,
            replica_tags: vec![None; m + 1],
            online_applied: 0,
            samples: Vec::new(),
        };
        engine.update_round_trips();
        Ok(engine)
    }

    fn update_round_trips(&mut self) {
        let m = self.ensemble.num_states() - 1;
        let bottom_replica = self.ensemble.replica_ids[0];
        let top_replica = self.ensemble.replica_ids[m];
        match self.replica_tags[bottom_replica] {
            Some(Extreme::Top) => {
                self.diagnostics.round_trips[bottom_replica] += 1;
                self.replica_tags[bottom_replica] = Some(Extreme::Bottom);
            }
            None => self.replica_tags[bottom_replica] = Some(Extreme::Bottom),
            Some(Extreme::Bottom) => {}
        }
        if m > 0 {
            match self.replica_tags[top_replica] {
                Some(Extreme::Bottom) | None => self.replica_tags[top_replica] = Some(Extreme::Top),
                Some(Extreme::Top) => {}
            }
        }
    }

    fn pair_outcome(&self, pair: usize, iteration: u64) -> PairOutcome<D::State> {
        let times = self.grid.pair_times(pair);
        let lower = &self.ensemble.states[pair - 1];
        let upper = &self.ensemble.states[pair];
        let mut rng_f = self
            .factory
            .stream(pair as u64, iteration, Purpose::CommunicationFwd);
        let mut rng_b = self
            .factory
            .stream(pair as u64, iteration, Purpose::CommunicationBwd);
        let fwd = match self.dynamics.simulate_fwd(lower, times, &mut rng_f) {
            Ok(p) => p,
            Err(Error::NonFinite { .. }) => {
                return PairOutcome {
                    pair,
                    result: None,
                    nonfinite: true,
                }
            }
            Err(_) => {
                return PairOutcome {
                    pair,
                    result: None,
                    nonfinite: true,
                }
            }
        };
        let bwd = match self.dynamics.simulate_bwd(upper, times, &mut rng_b) {
            Ok(p) => p,
            Err(_) => {
                return PairOutcome {
                    pair,
                    result: None,
                    nonfinite: true,
                }
            }
        };
        if !self.dynamics.is_finite_state(fwd.last()) || !self.dynamics.is_finite_state(bwd.first())
        {
            return PairOutcome {
                pair,
                result: None,
                nonfinite: true,
            };
        }
        let log_alpha = match self
            .dynamics
            .swap_log_accept(&fwd, &bwd, (pair - 1, pair), &self.grid)
        {
            Ok(v) => v,
            Err(_) => {
                return PairOutcome {
                    pair,
                    result: None,
                    nonfinite: true,
                }
            }
        };
        let mut rng_u = self
            .factory
            .stream(pair as u64, iteration, Purpose::SwapDecision);
        let u: f64 = rng_u.gen_range(f64::MIN_POSITIVE..1.0);
        let accepted = u.ln() < log_alpha;
        let result = if accepted {
            Some((bwd.first().clone(), fwd.last().clone(), true))
        } else {
            Some((lower.clone(), upper.clone(), false))
        };
        PairOutcome {
            pair,
            result,
            nonfinite: false,
        }
    }

    /// One communication sweep: every pair `(m-1, m)` with `m = iteration
    /// (mod 2)` simulates both proposal paths and applies the swap with the
    /// assembled acceptance. Pairs with matching parity are disjoint and run
    /// in parallel when workers > 1.
    pub fn communication_sweep(&mut self, iteration: u64) -> Result<()> {
        let m = self.grid.num_pairs();
        let parity = (iteration % 2) as usize;
        let pairs: Vec<usize> = (1..=m).filter(|p| p % 2 == parity).collect();
        let outcomes: Vec<PairOutcome<D::State>> = if self.config.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                pairs
                    .par_iter()
                    .map(|&p| self.pair_outcome(p, iteration))
                    .collect()
            })
        } else {
            pairs
                .iter()
                .map(|&p| self.pair_outcome(p, iteration))
                .collect()
        };
        let k = self.grid.substeps() as u64;
        let j = self.dynamics.models_per_eval();
        for out in outcomes {
            self.diagnostics.nfe += 2 * k * j;
            self.diagnostics.pair_attempts[out.pair - 1] += 1;
            match out.result {
                None => {
                    self.diagnostics.pairs_rejected_nonfinite += u64::from(out.nonfinite);
                }
                Some((lo, hi, accepted)) => {
                    if accepted {
                        self.ensemble.states[out.pair - 1] = lo;
                        self.ensemble.states[out.pair] = hi;
                        self.ensemble.replica_ids.swap(out.pair - 1, out.pair);
                        self.diagnostics.pair_accepts[out.pair - 1] += 1;
                    }
                }
            }
        }
        self.update_round_trips();
        Ok(())
    }

    /// Local exploration: one kernel step per level, plus the exact top-level
    /// refresh when enabled.
    pub fn local_explore(&mut self, iteration: u64) -> Result<()> {
        let m = self.grid.num_pairs();
        if self.config.local_move != LocalMove::Off {
            let kind = self.config.local_move;
            let top_levels = if self.config.resample_top_level { m } else { m + 1 };
            let updates: Vec<(usize, Option<D::State>)> = if self.config.workers > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(self.config.workers)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
                pool.install(|| {
                    use rayon::prelude::*;
                    (0..top_levels)
                        .into_par_iter()
                        .map(|level| {
                            let mut rng =
                                self.factory
                                    .stream(level as u64, iteration, Purpose::LocalMove);
                            let out = self
                                .dynamics
                                .local_move(
                                    &self.ensemble.states[level],
                                    level,
                                    &self.grid,
                                    kind,
                                    &mut rng,
                                )
                                .unwrap_or(None);
                            (level, out)
                        })
                        .collect()
                })
            } else {
                (0..top_levels)
                    .map(|level| {
                        let mut rng =
                            self.factory
                                .stream(level as u64, iteration, Purpose::LocalMove);
                        let out = self
                            .dynamics
                            .local_move(
                                &self.ensemble.states[level],
                                level,
                                &self.grid,
                                kind,
                                &mut rng,
                            )
                            .unwrap_or(None);
                        (level, out)
                    })
                    .collect()
            };
            for (level, update) in updates {
                match update {
                    Some(s) if self.dynamics.is_finite_state(&s) => {
                        self.ensemble.states[level] = s
                    }
                    Some(_) => self.diagnostics.pairs_rejected_nonfinite += 1,
                    None => self.diagnostics.local_moves_skipped += 1,
                }
            }
        }
        if self.config.resample_top_level {
            let mut rng = self
                .factory
                .stream(m as u64, iteration, Purpose::TopResample);
            self.ensemble.states[m] = self.dynamics.sample_top(&self.grid, &mut rng)?;
        }
        Ok(())
    }

    fn collect_sample(&mut self, iteration: u64) -> Result<()> {
        let mut rng = self.factory.stream(0, iteration, Purpose::Completion);
        let times = self.grid.completion_times();
        let state = if times.len() > 1 {
            self.diagnostics.completion_evals +=
                (times.len() as u64 - 1) * self.dynamics.models_per_eval();
            self.dynamics
                .complete(&self.ensemble.states[0], times, &mut rng)?
        } else {
            self.ensemble.states[0].clone()
        };
        self.samples.push(SampleRow {
            iteration,
            replica_id: self.ensemble.replica_ids[0],
            state,
        });
        self.diagnostics.samples_collected += 1;
        Ok(())
    }

    fn apply_online_events(&mut self, iteration: u64) -> Result<()> {
        let events: Vec<RewardTerm> = self
            .config
            .online
            .iter()
            .skip(self.online_applied as usize)
            .take_while(|ev| ev.at_iteration <= iteration)
            .map(|ev| ev.reward.clone())
            .collect();
        for term in events {
            self.dynamics.apply_reward(term)?;
            self.online_applied += 1;
        }
        Ok(())
    }

    /// Run iterations `ensemble.iteration + 1 ..= config.iterations`.
    pub fn run(&mut self) -> Result<()> {
        let start = std::time::Instant::now();
        let n_total = self.config.iterations;
        let mut n = self.ensemble.iteration;
        while n < n_total {
            n += 1;
            self.apply_online_events(n)?;
            self.communication_sweep(n)?;
            self.local_explore(n)?;
            self.ensemble.iteration = n;
            self.ensemble.check_permutation()?;
            if n > self.config.burn_in {
                self.collect_sample(n)?;
            }
        }
        self.diagnostics.wall_time_s += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<D::State> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            ensemble: self.ensemble.clone(),
            diagnostics: self.diagnostics.clone(),
            replica_tags: self.replica_tags.clone(),
            online_applied: self.online_applied,
        }
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.checkpoint())?;
        Ok(())
    }

    /// Restore engine state from a checkpoint. The dynamics, grid, and config
    /// must be rebuilt from the same experiment config; the recorded hash is
    /// compared to refuse mismatched resumes.
    pub fn resume(
        dynamics: D,
        grid: TimeGrid,
        config: EngineConfig,
        config_hash: &str,
        checkpoint: Checkpoint<D::State>,
    ) -> Result<Self> {
        config.validate()?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {})",
                checkpoint.version, CHECKPOINT_VERSION
            )));
        }
        if checkpoint.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint was written for {}, current config hashes to {}",
                checkpoint.config_hash, config_hash
            )));
        }
        if checkpoint.ensemble.num_states() != grid.num_states() {
            return Err(Error::Checkpoint(format!(
                "ladder size mismatch: {} states vs {} grid levels",
                checkpoint.ensemble.num_states(),
                grid.num_states()
            )));
        }
        checkpoint.ensemble.check_permutation()?;
        let mut engine = Engine {
            dynamics,
            grid,
            factory: RngFactory::new(config.seed),
            config,
            config_hash: config_hash.to_string(),
            ensemble: checkpoint.ensemble,
            diagnostics: checkpoint.diagnostics,
            replica_tags: checkpoint.replica_tags,
            online_applied: 0,
            samples: Vec::new(),
        };
        // re-apply online events up to the checkpoint iteration so the task
        // state matches, then fast-forward the applied counter
        let it = engine.ensemble.iteration;
        engine.apply_online_events(it)?;
        if engine.online_applied != checkpoint.online_applied {
            return Err(Error::Checkpoint(
                "online event schedule does not match the checkpoint".into(),
            ));
        }
        Ok(engine)
    }

    pub fn read_checkpoint(path: &Path) -> Result<Checkpoint<D::State>> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint<D::State> = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        Ok(ckpt)
    }
}

// ---------------------------------------------------------------------------
// Continuous dynamics
// ---------------------------------------------------------------------------

pub struct ContinuousDynamics {
    pub task: ContinuousTask,
}

impl ContinuousDynamics {
    pub fn new(task: ContinuousTask) -> Result<Self> {
        task.validate()?;
        Ok(ContinuousDynamics { task })
    }

    /// The guided reverse dynamics, used for initialisation and for
    /// completing samples below the truncation time. Under the heuristic
    /// proposal the denoising drift is the forward proposal drift integrated
    /// backward; under the exact-reversal proposal the backward proposal is
    /// already the model reversal.
    fn denoising_process(&self) -> SdeProcess {
        let (fwd, bwd) = self.task.proposal_pair();
        match self.task.proposal {
            crate::tasks::ProposalStyle::TaskHeuristic => {
                SdeProcess::backward(fwd.drift.clone(), fwd.sigma)
            }
            crate::tasks::ProposalStyle::ExactReversal => bwd,
        }
    }
}

impl Dynamics for ContinuousDynamics {
    type State = Vec<f64>;

    fn state_labels(&self) -> Vec<String> {
        (0..self.task.dim()).map(|i| format!("x{i}")).collect()
    }

    fn state_fields(&self, s: &Self::State) -> Vec<String> {
        s.iter().map(|v| format!("{v:?}")).collect()
    }

    fn is_finite_state(&self, s: &Self::State) -> bool {
        s.iter().all(|v| v.is_finite())
    }

    fn models_per_eval(&self) -> u64 {
        self.task.models.len() as u64
    }

    fn sample_top(&self, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Result<Self::State> {
        self.task.sample_top(grid.t_max(), rng)
    }

    fn simulate_fwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        let (fwd, _) = self.task.proposal_pair();
        simulate_segment(x, times, &fwd, rng)
    }

    fn simulate_bwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        let (_, bwd) = self.task.proposal_pair();
        simulate_segment(x, times, &bwd, rng)
    }

    fn swap_log_accept(
        &self,
        fwd: &PathSegment<Self::State>,
        bwd: &PathSegment<Self::State>,
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> Result<f64> {
        self.task.swap_log_accept(fwd, bwd, levels, grid)
    }

    fn local_move(
        &self,
        x: &Self::State,
        level: usize,
        grid: &TimeGrid,
        kind: LocalMove,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Self::State>> {
        if kind != LocalMove::Ula {
            return Ok(None);
        }
        let t = grid.level_time(level);
        let eps = 0.5 * self.task.sigma().sigma2(t) * grid.level_substep(level);
        if !(eps > 0.0) {
            return Ok(None);
        }
        let score = self.task.target_score(x, level, grid);
        let scale = (2.0 * eps).sqrt();
        let out = x
            .iter()
            .zip(score.iter())
            .map(|(xi, si)| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                xi + eps * si + scale * z
            })
            .collect();
        Ok(Some(out))
    }

    fn complete(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self::State> {
        let denoiser = self.denoising_process();
        let mut cur = x.clone();
        for i in (0..times.len() - 1).rev() {
            let dt = times[i + 1] - times[i];
            cur = em_step(&cur, times[i + 1], dt, &denoiser, rng)?;
        }
        Ok(cur)
    }

    fn init_descend(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        simulate_segment(x, times, &self.denoising_process(), rng)
    }

    fn apply_reward(&mut self, term: RewardTerm) -> Result<()> {
        self.task.reward = Some(term);
        self.task.validate()
    }

    fn smc_propagate(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        simulate_segment(x, times, &self.denoising_process(), rng)
    }

    fn segment_log_weight(
        &self,
        path: &PathSegment<Self::State>,
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> Result<f64> {
        let rnes = self.task.smc_path_rnes(path)?;
        if !rnes.all_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let ltr = self
            .task
            .log_target_ratio(&rnes, (path.first(), path.last()), levels, grid);
        Ok(-(ltr + rnes.q))
    }
}

// ---------------------------------------------------------------------------
// Discrete dynamics
// ---------------------------------------------------------------------------

pub struct DiscreteDynamics {
    pub task: DiscreteCfgTask,
}

impl DiscreteDynamics {
    pub fn new(task: DiscreteCfgTask) -> Self {
        DiscreteDynamics { task }
    }
}

impl Dynamics for DiscreteDynamics {
    type State = DiscreteState;

    fn state_labels(&self) -> Vec<String> {
        (0..self.task.positions())
            .map(|i| format!("tok{i}"))
            .collect()
    }

    fn state_fields(&self, s: &Self::State) -> Vec<String> {
        s.tokens.iter().map(|t| t.to_string()).collect()
    }

    fn is_finite_state(&self, s: &Self::State) -> bool {
        s.tokens.iter().all(|&t| t < self.task.vocab())
    }

    fn models_per_eval(&self) -> u64 {
        2
    }

    fn sample_top(&self, _grid: &TimeGrid, _rng: &mut ChaCha8Rng) -> Result<Self::State> {
        Ok(self.task.sample_top())
    }

    fn simulate_fwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        let (fwd, _) = self.task.proposal_pair();
        crate::ctmc::simulate_segment_ctmc(x, times, &fwd, rng)
    }

    fn simulate_bwd(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathSegment<Self::State>> {
        let (_, bwd) = self.task.proposal_pair();
        crate::ctmc::simulate_segment_ctmc(x, times, &bwd, rng)
    }

    fn swap_log_accept(
        &self,
        fwd: &PathSegment<Self::State>,
        bwd: &PathSegment<Self::State>,
        _levels: (usize, usize),
        _grid: &TimeGrid,
    ) -> Result<f64> {
        self.task.swap_log_accept(fwd, bwd)
    }

    fn local_move(
        &self,
        x: &Self::State,
        level: usize,
        grid: &TimeGrid,
        kind: LocalMove,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Self::State>> {
        if kind != LocalMove::CtmcMh {
            return Ok(None);
        }
        let t = grid.level_time(level);
        Ok(Some(self.task.mh_local_move(x, t, rng)))
    }

    fn complete(
        &self,
        x: &Self::State,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self::State> {
        self.task.complete(x, times, rng)
    }

    fn apply_reward(&mut self, _term: RewardTerm) -> Result<()> {
        Err(Error::InvalidConfig(
            "online reward refinement applies to continuous tasks only".into(),
        ))
    }

    fn segment_log_weight(
        &self,
        path: &PathSegment<Self::State>,
        _levels: (usize, usize),
        _grid: &TimeGrid,
    ) -> Result<f64> {
        let rnes = self.task.path_rnes(path)?;
        if !rnes.all_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(-(self.task.log_target_ratio(&rnes) + rnes.q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianMixtureModel;
    use crate::tasks::{ProposalStyle, TaskKind};
    use std::sync::Arc;

    fn tempering_engine(
        beta: f64,
        iterations: u64,
        seed: u64,
        pairs: usize,
    ) -> Engine<ContinuousDynamics> {
        let task = ContinuousTask::new(
            TaskKind::Tempering { beta },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.5, 1.0, pairs, 2).unwrap();
        let config = EngineConfig {
            iterations,
            burn_in: 0,
            local_move: LocalMove::Ula,
            resample_top_level: true,
            seed,
            online: vec![],
            workers: 1,
        };
        Engine::init(ContinuousDynamics::new(task).unwrap(), grid, config, "test").unwrap()
    }

    #[test]
    fn degenerate_single_state_ladder_is_rejected_but_one_pair_works() {
        assert!(TimeGrid::uniform(0.5, 1.0, 0, 2).is_err());
        let mut e = tempering_engine(1.5, 3, 9, 1);
        e.run().unwrap();
        assert_eq!(e.samples.len(), 3);
    }

    #[test]
    fn parity_covers_every_interior_pair_over_two_iterations() {
        let mut e = tempering_engine(1.5, 2, 10, 6);
        e.run().unwrap();
        for (i, &att) in e.diagnostics.pair_attempts.iter().enumerate() {
            assert_eq!(att, 1, "pair {i} attempted once over two sweeps");
        }
    }

    #[test]
    fn permutation_invariant_and_round_trips_monotone() {
        let mut e = tempering_engine(2.0, 60, 11, 4);
        let mut last = 0;
        for n in 1..=60u64 {
            e.config.iterations = n;
            e.run().unwrap();
            e.ensemble.check_permutation().unwrap();
            let rt = e.diagnostics.total_round_trips();
            assert!(rt >= last);
            last = rt;
        }
    }

    #[test]
    fn burn_in_swallows_all_samples() {
        let task = ContinuousTask::new(
            TaskKind::Tempering { beta: 1.0 },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.5, 1.0, 2, 2).unwrap();
        let config = EngineConfig {
            iterations: 5,
            burn_in: 5,
            local_move: LocalMove::Off,
            resample_top_level: false,
            seed: 1,
            online: vec![],
            workers: 1,
        };
        // burn_in above the iteration count is rejected
        let mut bad = config.clone();
        bad.burn_in = 6;
        assert!(bad.validate().is_err());
        // iterations == burn_in runs but collects nothing
        let mut e = Engine::init(
            ContinuousDynamics::new(task.clone()).unwrap(),
            grid.clone(),
            config.clone(),
            "t",
        )
        .unwrap();
        e.run().unwrap();
        assert_eq!(e.samples.len(), 0);
        assert!(e.diagnostics.pair_attempts.iter().sum::<u64>() > 0);
        // a zero-iteration run is a legal no-op
        let mut zero_cfg = config;
        zero_cfg.iterations = 0;
        zero_cfg.burn_in = 0;
        let mut e =
            Engine::init(ContinuousDynamics::new(task).unwrap(), grid, zero_cfg, "t").unwrap();
        e.run().unwrap();
        assert_eq!(e.samples.len(), 0);
    }

    #[test]
    fn nfe_matches_the_communication_budget() {
        // even pair count: every iteration touches pairs/2 pairs in both
        // directions with substeps evaluations each
        let mut e = tempering_engine(1.0, 40, 12, 6);
        e.run().unwrap();
        let m = 6u64;
        let k = 2u64;
        assert_eq!(e.diagnostics.nfe, 40 * (m / 2) * 2 * k);
    }

    #[test]
    fn exact_reversal_accepts_everything() {
        let task = ContinuousTask::new(
            TaskKind::Tempering { beta: 1.0 },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap()
        .with_proposal(ProposalStyle::ExactReversal);
        let grid = TimeGrid::uniform(0.9, 1.0, 4, 5).unwrap();
        let config = EngineConfig {
            iterations: 50,
            burn_in: 0,
            local_move: LocalMove::Off,
            resample_top_level: true,
            seed: 3,
            online: vec![],
            workers: 1,
        };
        let mut e =
            Engine::init(ContinuousDynamics::new(task).unwrap(), grid, config, "t").unwrap();
        e.run().unwrap();
        let rates = e.diagnostics.acceptance_rates();
        for r in rates {
            assert!(r > 0.999, "acceptance {r}");
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut a = tempering_engine(2.0, 25, 77, 5);
        a.run().unwrap();
        let mut b = tempering_engine(2.0, 25, 77, 5);
        b.config.workers = 3;
        b.run().unwrap();
        assert_eq!(a.ensemble.states, b.ensemble.states);
        assert_eq!(a.ensemble.replica_ids, b.ensemble.replica_ids);
        assert_eq!(
            a.samples.iter().map(|s| &s.state).collect::<Vec<_>>(),
            b.samples.iter().map(|s| &s.state).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_equals_uninterrupted() {
        let dir = std::env::temp_dir().join(format!("crepe-engine-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        // uninterrupted reference run
        let mut full = tempering_engine(2.0, 10, 5, 4);
        full.run().unwrap();

        // interrupted at iteration 6
        let mut part = tempering_engine(2.0, 6, 5, 4);
        part.run().unwrap();
        let path = dir.join("ck.json");
        part.write_checkpoint(&path).unwrap();

        let ck = Engine::<ContinuousDynamics>::read_checkpoint(&path).unwrap();
        // immediate round trip is lossless
        assert_eq!(ck.ensemble, part.ensemble);

        let task = ContinuousTask::new(
            TaskKind::Tempering { beta: 2.0 },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.5, 1.0, 4, 2).unwrap();
        let config = EngineConfig {
            iterations: 10,
            burn_in: 0,
            local_move: LocalMove::Ula,
            resample_top_level: true,
            seed: 5,
            online: vec![],
            workers: 1,
        };
        let mut resumed = Engine::resume(
            ContinuousDynamics::new(task).unwrap(),
            grid,
            config,
            "test",
            ck,
        )
        .unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.ensemble, full.ensemble);
        let tail: Vec<_> = full.samples[6..].iter().map(|s| &s.state).collect();
        let resumed_states: Vec<_> = resumed.samples.iter().map(|s| &s.state).collect();
        assert_eq!(tail, resumed_states);

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoint_is_a_structured_error() {
        let dir = std::env::temp_dir().join(format!("crepe-engine-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, b"{not json").unwrap();
        let err = Engine::<ContinuousDynamics>::read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resume_refuses_config_mismatch() {
        let mut part = tempering_engine(2.0, 4, 5, 4);
        part.run().unwrap();
        let ck = part.checkpoint();
        let task = ContinuousTask::new(
            TaskKind::Tempering { beta: 2.0 },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.5, 1.0, 4, 2).unwrap();
        let config = EngineConfig {
            iterations: 10,
            burn_in: 0,
            local_move: LocalMove::Ula,
            resample_top_level: true,
            seed: 5,
            online: vec![],
            workers: 1,
        };
        match Engine::resume(
            ContinuousDynamics::new(task).unwrap(),
            grid,
            config,
            "a-different-config",
            ck,
        ) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("config mismatch")),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("mismatched resume must be refused"),
        }
    }

    #[test]
    fn resume_across_an_online_event_matches_uninterrupted() {
        use crate::tasks::{RewardKind, RewardSchedule, RewardSpec, RewardTerm};
        let term = RewardTerm {
            spec: RewardSpec {
                kind: RewardKind::Quadratic {
                    center: vec![1.5],
                    scale: 0.8,
                },
                cheap_gradient: true,
            },
            schedule: RewardSchedule::new(5.0),
        };
        let make = |iterations: u64| {
            let task = ContinuousTask::new(
                TaskKind::Tempering { beta: 1.0 },
                vec![Arc::new(GaussianMixtureModel::default_bimodal())],
            )
            .unwrap();
            let grid = TimeGrid::uniform(0.5, 1.0, 4, 2).unwrap();
            let config = EngineConfig {
                iterations,
                burn_in: 0,
                local_move: LocalMove::Ula,
                resample_top_level: true,
                seed: 31,
                online: vec![OnlineEvent {
                    at_iteration: 4,
                    reward: term.clone(),
                }],
                workers: 1,
            };
            Engine::init(ContinuousDynamics::new(task).unwrap(), grid, config, "ev").unwrap()
        };
        let mut full = make(10);
        full.run().unwrap();
        let mut part = make(6);
        part.run().unwrap();
        let ck = part.checkpoint();
        let mut resumed = {
            let grid = TimeGrid::uniform(0.5, 1.0, 4, 2).unwrap();
            let config = EngineConfig {
                iterations: 10,
                burn_in: 0,
                local_move: LocalMove::Ula,
                resample_top_level: true,
                seed: 31,
                online: vec![OnlineEvent {
                    at_iteration: 4,
                    reward: term.clone(),
                }],
                workers: 1,
            };
            Engine::resume(
                ContinuousDynamics::new(
                    ContinuousTask::new(
                        TaskKind::Tempering { beta: 1.0 },
                        vec![Arc::new(GaussianMixtureModel::default_bimodal())],
                    )
                    .unwrap(),
                )
                .unwrap(),
                grid,
                config,
                "ev",
                ck,
            )
            .unwrap()
        };
        resumed.run().unwrap();
        assert_eq!(resumed.ensemble, full.ensemble);
        // the resumed engine re-applied the event before continuing
        assert!(resumed.dynamics.task.reward.is_some());
    }

    #[test]
    fn gaussian_top_level_matches_reference_moments() {
        let task = ContinuousTask::new(
            TaskKind::Tempering { beta: 2.0 },
            vec![Arc::new(GaussianMixtureModel::default_bimodal())],
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.5, 10.0, 4, 2).unwrap();
        let dynamics = ContinuousDynamics::new(task).unwrap();
        let (mean, var) = dynamics.task.top_reference(10.0).unwrap();
        let f = RngFactory::new(99);
        let n = 1000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let mut rng = f.stream(i, 0, Purpose::Oracle);
            let x = dynamics.sample_top(&grid, &mut rng).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let emp_mean = sum / n as f64;
        let emp_var = sumsq / n as f64 - emp_mean * emp_mean;
        let se_mean = (var / n as f64).sqrt();
        assert!((emp_mean - mean[0]).abs() < 4.0 * se_mean);
        let se_var = var * (2.0 / n as f64).sqrt();
        assert!((emp_var - var).abs() < 4.0 * se_var);
    }
}
